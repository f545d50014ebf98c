"""Compiled inner loops: Philox4x32-10 normals and cyclic tridiagonal solves."""

import math

import numpy as np
from numba import njit

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_BIT31 = np.uint64(0x80000000)
_TWO32 = np.int64(4294967296)
_LOW7 = np.int64(127)

# Words are carried in uint64 registers; mixing uint32 with signed ints makes
# numba fall back to float arithmetic.


@njit(cache=True, inline="always")
def _philox_round(c0, c1, c2, c3, k0, k1):
    p0 = c0 * _PHILOX_M0
    p1 = c2 * _PHILOX_M1
    return (p1 >> _SHIFT32) ^ c1 ^ k0, p1 & _MASK32, (p0 >> _SHIFT32) ^ c3 ^ k1, p0 & _MASK32


@njit(cache=True, inline="always")
def _philox(c0, c1, c2, c3, k0, k1):
    for _ in range(9):
        c0, c1, c2, c3 = _philox_round(c0, c1, c2, c3, k0, k1)
        k0 = (k0 + _PHILOX_W0) & _MASK32
        k1 = (k1 + _PHILOX_W1) & _MASK32
    return _philox_round(c0, c1, c2, c3, k0, k1)


@njit(cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x32 block on 32-bit words."""
    return _philox(np.uint64(c0) & _MASK32, np.uint64(c1) & _MASK32,
                   np.uint64(c2) & _MASK32, np.uint64(c3) & _MASK32,
                   np.uint64(k0) & _MASK32, np.uint64(k1) & _MASK32)


def _ziggurat_tables():
    # Marsaglia & Tsang (2000), 128 layers
    m1 = 2147483648.0
    dn = 3.442619855899
    tn = dn
    vn = 9.91256303526217e-3
    kn = np.zeros(128, dtype=np.int64)
    wn = np.zeros(128)
    fn = np.zeros(128)
    q = vn / np.exp(-0.5 * dn * dn)
    kn[0] = int((dn / q) * m1)
    kn[1] = 0
    wn[0] = q / m1
    wn[127] = dn / m1
    fn[0] = 1.0
    fn[127] = np.exp(-0.5 * dn * dn)
    for i in range(126, 0, -1):
        dn = np.sqrt(-2.0 * np.log(vn / dn + np.exp(-0.5 * dn * dn)))
        kn[i + 1] = int((dn / tn) * m1)
        tn = dn
        fn[i] = np.exp(-0.5 * dn * dn)
        wn[i] = dn / m1
    return kn, wn, fn


_KN, _WN, _FN = _ziggurat_tables()
_ZIG_R = 3.442620


@njit(cache=True, inline="always")
def _signed(word):
    h = np.int64(word)
    if word >= _BIT31:
        h -= _TWO32
    return h


@njit(cache=True, inline="always")
def _unit(word):
    return (np.float64(word) + 0.5) * 2.3283064365386963e-10


@njit(cache=True)
def _ziggurat_slow(hz, iz, cb, lane, s_lo, s_hi, k0, k1, kn, wn, fn):
    # Rejection branch; fresh words come from counters (block, step, lane + 4*attempt).
    w0 = w1 = w2 = w3 = np.uint64(0)
    pos = 4
    attempt = np.uint64(0)
    four = np.uint64(4)
    while True:
        x = hz * wn[iz]
        if iz == 0:
            while True:
                if pos == 4:
                    attempt += np.uint64(1)
                    w0, w1, w2, w3 = _philox(cb, s_lo, s_hi, lane + four * attempt, k0, k1)
                    pos = 0
                if pos == 0:
                    u1, u2 = _unit(w0), _unit(w1)
                else:
                    u1, u2 = _unit(w2), _unit(w3)
                pos += 2
                x = -np.log(u1) * 0.2904764
                y = -np.log(u2)
                if y + y >= x * x:
                    break
            return _ZIG_R + x if hz > 0 else -_ZIG_R - x
        for _ in range(2):
            if pos == 4:
                attempt += np.uint64(1)
                w0, w1, w2, w3 = _philox(cb, s_lo, s_hi, lane + four * attempt, k0, k1)
                pos = 0
            if pos == 0:
                word = w0
            elif pos == 1:
                word = w1
            elif pos == 2:
                word = w2
            else:
                word = w3
            pos += 1
            if _ == 0:
                if fn[iz] + _unit(word) * (fn[iz - 1] - fn[iz]) < np.exp(-0.5 * x * x):
                    return x
            else:
                hz = _signed(word)
                iz = hz & _LOW7
                if abs(hz) < kn[iz]:
                    return hz * wn[iz]


@njit(cache=True)
def _philox_normals(keys, step, out, kn, wn, fn):
    m, n = out.shape
    st = np.uint64(step)
    s_lo = st & _MASK32
    s_hi = st >> _SHIFT32
    zero = np.uint64(0)
    nblocks = (n + 3) // 4
    for r in range(m):
        k0 = np.uint64(keys[r, 0]) & _MASK32
        k1 = np.uint64(keys[r, 1]) & _MASK32
        for j in range(nblocks):
            cb = np.uint64(j)
            words = _philox(cb, s_lo, s_hi, zero, k0, k1)
            for lane in range(min(4, n - 4 * j)):
                hz = _signed(words[lane])
                iz = hz & _LOW7
                if abs(hz) < kn[iz]:
                    out[r, 4 * j + lane] = hz * wn[iz]
                else:
                    out[r, 4 * j + lane] = _ziggurat_slow(
                        hz, iz, cb, np.uint64(lane), s_lo, s_hi, k0, k1, kn, wn, fn)
    return out


def philox_normals(keys, step, out):
    """Fill ``out[m, n]`` with standard normals.

    Row ``r`` is keyed by ``keys[r]`` (two uint32 words). Cells ``4j .. 4j+3``
    take one 32-bit lane each of the Philox block at counter
    ``(j, step_lo, step_hi, 0)`` and map it through the ziggurat; rejections
    draw from counters ``(j, step_lo, step_hi, lane + 4*attempt)``. Every
    value is therefore a pure function of (key, step, cell).
    """
    return _philox_normals(keys, step, out, _KN, _WN, _FN)


def cyclic_factor(lower, diag, upper):
    """Precompute the Sherman-Morrison/Thomas factors of a periodic tridiagonal matrix.

    Row ``i`` is ``lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1]`` (indices mod n).
    """
    lower = np.asarray(lower, dtype=float)
    diag = np.asarray(diag, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = diag.shape[0]
    alpha = upper[n - 1]
    beta = lower[0]
    gamma = -diag[0]
    bb = diag.copy()
    bb[0] = diag[0] - gamma
    bb[n - 1] = diag[n - 1] - alpha * beta / gamma
    cp = np.zeros(n)
    denom = np.empty(n)
    denom[0] = bb[0]
    cp[0] = upper[0] / bb[0]
    for i in range(1, n):
        denom[i] = bb[i] - lower[i] * cp[i - 1]
        if i < n - 1:
            cp[i] = upper[i] / denom[i]
    u = np.zeros(n)
    u[0] = gamma
    u[n - 1] = alpha
    z = np.empty(n)
    z[0] = u[0] / denom[0]
    for i in range(1, n):
        z[i] = (u[i] - lower[i] * z[i - 1]) / denom[i]
    for i in range(n - 2, -1, -1):
        z[i] -= cp[i] * z[i + 1]
    zfac = 1.0 + z[0] + beta * z[n - 1] / gamma
    corr = np.array([1.0 / zfac, beta / gamma])
    return lower.copy(), 1.0 / denom, cp, z, corr


@njit(cache=True)
def cyclic_solve(factors_lower, inv_denom, cp, z, corr, rhs, out):
    """Apply a precomputed cyclic factorization to every row of ``rhs``."""
    m, n = rhs.shape
    inv_zfac = corr[0]
    bg = corr[1]
    y = np.empty(n)
    for r in range(m):
        y[0] = rhs[r, 0] * inv_denom[0]
        for i in range(1, n):
            y[i] = (rhs[r, i] - factors_lower[i] * y[i - 1]) * inv_denom[i]
        for i in range(n - 2, -1, -1):
            y[i] -= cp[i] * y[i + 1]
        fact = (y[0] + bg * y[n - 1]) * inv_zfac
        for i in range(n):
            out[r, i] = y[i] - fact * z[i]
    return out


@njit(cache=True)
def clamp_below(values, floor, counts):
    """In-place ``max(values, floor)`` per row; adds clamp events to ``counts``."""
    m, n = values.shape
    for r in range(m):
        c = 0
        for i in range(n):
            if values[r, i] < floor:
                values[r, i] = floor
                c += 1
        counts[r] += c
    return counts


_RESCALE_HI = 2.0 ** 64
_RESCALE_LO = 2.0 ** -64


@njit(cache=True)
def _finish_row(y, r, values, exponent, growth, floor, clamp_counts, row_max):
    # growth factor, positivity floor (physical units) and exact power-of-two rescale;
    # row_max[r] receives the final mantissa sup-norm, or nan if a value is not finite
    n = y.shape[0]
    finite = True
    fl = floor
    if floor != 0.0:
        fl = math.ldexp(floor, -exponent[r])
    c = 0
    mx = 0.0
    for i in range(n):
        v = y[i] * growth
        if v < fl:
            v = fl
            c += 1
        values[r, i] = v
        a = abs(v)
        if a > mx:
            mx = a
        elif not a <= mx:
            finite = False
    clamp_counts[r] += c
    if not finite or mx == np.inf:
        row_max[r] = np.nan
        return
    if mx > 0.0 and (mx > _RESCALE_HI or mx < _RESCALE_LO):
        e = math.frexp(mx)[1]
        for i in range(n):
            values[r, i] = math.ldexp(values[r, i], -e)
        exponent[r] += e
        mx = math.ldexp(mx, -e)
    row_max[r] = mx


@njit(cache=True)
def implicit_finish(rhs, values, exponent, growth, lower, inv_denom, cp, z, corr,
                    implicit, floor, clamp_counts, row_max):
    """Implicit solve and ``growth`` scaling, then floor and renormalise each row in place.

    ``rhs`` and ``values`` are mantissas relative to ``2**exponent[r]``.
    """
    m, n = rhs.shape
    y = np.empty(n)
    inv_zfac = corr[0]
    bg = corr[1]
    for r in range(m):
        if implicit:
            y[0] = rhs[r, 0] * inv_denom[0]
            for i in range(1, n):
                y[i] = (rhs[r, i] - lower[i] * y[i - 1]) * inv_denom[i]
            for i in range(n - 2, -1, -1):
                y[i] -= cp[i] * y[i + 1]
            fact = (y[0] + bg * y[n - 1]) * inv_zfac
            for i in range(n):
                y[i] = y[i] - fact * z[i]
        else:
            for i in range(n):
                y[i] = rhs[r, i]
        _finish_row(y, r, values, exponent, growth, floor, clamp_counts, row_max)


@njit(cache=True)
def pam_fused_step(values, exponent, keys, step, noise_scale, sigma, rem, growth,
                   lower, inv_denom, cp, z, corr, floor, clamp_counts, row_max, kn, wn, fn):
    """One fully implicit step of the linear equation, noise generated inline.

    The right-hand side is ``values * (1 + rem + sigma * noise_scale * Z)``
    with ``Z`` the Philox/ziggurat normals of ``(keys[r], step)``.
    """
    m, n = values.shape
    noise = np.empty((1, n))
    y = np.empty(n)
    inv_zfac = corr[0]
    bg = corr[1]
    for r in range(m):
        _philox_normals(keys[r:r + 1], step, noise, kn, wn, fn)
        for i in range(n):
            y[i] = values[r, i] * (1.0 + rem + sigma * (noise[0, i] * noise_scale))
        y[0] = y[0] * inv_denom[0]
        for i in range(1, n):
            y[i] = (y[i] - lower[i] * y[i - 1]) * inv_denom[i]
        for i in range(n - 2, -1, -1):
            y[i] -= cp[i] * y[i + 1]
        fact = (y[0] + bg * y[n - 1]) * inv_zfac
        for i in range(n):
            y[i] = y[i] - fact * z[i]
        _finish_row(y, r, values, exponent, growth, floor, clamp_counts, row_max)
