"""Compiled path kernels for :class:`~graphlimit.model.AnnulusModel`.

One step is the slow Brownian move of ``a1 = I`` followed by the fast move
of ``a0 / eps``; both are Metropolis-adjusted so that Lebesgue measure on
the disk is exactly invariant for every ``dt``.  Per step, the kernels draw
four standard normals for every path of the block and then two uniforms
for every path, the order used by the vectorized engine in
:mod:`graphlimit.sde`.
"""

import math

import numpy as np
from numba import njit

R_G = 2.0

F_RADIAL, F_ZERO, F_ONE = 0, 1, 2


@njit(cache=True)
def forcing(r, kind, offset):
    if kind == F_RADIAL:
        return r - 4.0 / 3.0 + offset
    if kind == F_ZERO:
        return offset
    return 1.0 + offset


@njit(cache=True)
def h_ext(r):
    if r < 1.0:
        return 0.5 * (r * r - 1.0)
    return r - 1.0


@njit(cache=True)
def _mirror_density(ax, ay, bx, by, dt):
    """Unnormalized density of ``b`` for a Gaussian step from ``a`` followed by
    the radial mirror ``r -> 4 - r`` (both preimages of ``b``)."""
    rb = math.hypot(bx, by)
    d2 = (bx - ax) ** 2 + (by - ay) ** 2
    q = math.exp(-d2 / (2.0 * dt))
    if rb > 0.0:
        rs = 2.0 * R_G - rb
        sx = bx * rs / rb
        sy = by * rs / rb
        q += math.exp(-((sx - ax) ** 2 + (sy - ay) ** 2) / (2.0 * dt)) * rs / rb
    return q


@njit(cache=True)
def slow_step(x, y, dt, z1, z2, u1):
    """Brownian step with radial mirror at ``r = 2`` and a Metropolis test that
    makes the kernel exactly reversible for Lebesgue measure."""
    sdt = math.sqrt(dt)
    px = x + sdt * z1
    py = y + sdt * z2
    rp = math.hypot(px, py)
    if rp > R_G:
        scale = (2.0 * R_G - rp) / rp
        px *= scale
        py *= scale
        rp = abs(2.0 * R_G - rp)
    # away from the wall both mirror terms are below exp(-50)
    if max(math.hypot(x, y), rp) > R_G - 10.0 * sdt:
        fwd = _mirror_density(x, y, px, py, dt)
        bwd = _mirror_density(px, py, x, y, dt)
        if u1 * fwd >= bwd:
            return x, y
    return px, py


@njit(cache=True)
def _log_q(w, w2, mean_shift, var):
    # reflected Gaussian proposal density in w (reflection at w = 0); the
    # mirror term is below exp(-50) relative unless the mean is near 0
    m = w + mean_shift
    a = -(w2 - m) ** 2 / (2.0 * var)
    if w2 * m > 25.0 * var:
        return a
    b = -(-w2 - m) ** 2 / (2.0 * var)
    hi = max(a, b)
    return hi + math.log(math.exp(a - hi) + math.exp(b - hi))


@njit(cache=True)
def fast_step(x, y, dt, eps, z3, z4, u2):
    """Exact rotation along the circles, then a Metropolis-adjusted Langevin
    step for the radial part in ``w = log(r - 1)`` (``r > 1`` only).

    In ``w`` the radial fast motion has constant diffusion ``1/eps`` and
    invariant density ``(1 + e^w) e^w`` (Lebesgue measure ``r dr``).
    """
    r = math.hypot(x, y)
    if r == 0.0:
        return x, y
    phi = math.sqrt(dt / (eps * r)) * z3
    cp = math.cos(phi)
    sp = math.sin(phi)
    c = x / r
    s = y / r
    c, s = c * cp - s * sp, s * cp + c * sp
    r_new = r
    if r > 1.0 and r <= R_G:
        w = math.log(r - 1.0)
        var = dt / eps
        shift = (1.0 + (r - 1.0) / r) * dt / (2.0 * eps)
        w2 = w + shift + math.sqrt(var) * z4
        if w2 > 0.0:
            w2 = -w2
        r2 = 1.0 + math.exp(w2)
        shift2 = (1.0 + (r2 - 1.0) / r2) * dt / (2.0 * eps)
        log_a = math.log(r2 / r) + (w2 - w) + _log_q(w2, w, shift2, var) - _log_q(w, w2, shift, var)
        if log_a >= 0.0 or u2 < math.exp(log_a):
            r_new = r2
    return r_new * c, r_new * s


@njit(cache=True)
def split_step(x, y, dt, eps, z1, z2, z3, z4, u1, u2):
    x, y = slow_step(x, y, dt, z1, z2, u1)
    return fast_step(x, y, dt, eps, z3, z4, u2)


@njit(cache=True)
def run_block(x0, n_paths, n_steps, dt, eps, rec_steps, n_windows, f_kind, f_offset, gen):
    """Advance ``n_paths`` copies of every start in ``x0`` with shared noise.

    Returns recorded states ``(S, P, R, 2)``, steps spent in ``r >= 1`` per
    path ``(S, P)`` and window integrals of ``f`` ``(S, P, W)``.
    """
    S = x0.shape[0]
    R = rec_steps.shape[0]
    xs = np.empty((S, n_paths))
    ys = np.empty((S, n_paths))
    for s in range(S):
        for p in range(n_paths):
            xs[s, p] = x0[s, 0]
            ys[s, p] = x0[s, 1]
    states = np.empty((S, n_paths, R, 2))
    occ = np.zeros((S, n_paths))
    fint = np.zeros((S, n_paths, n_windows))
    per_window = max(1, n_steps // n_windows)
    z = np.empty((n_paths, 4))
    u = np.empty((n_paths, 2))
    j = 0
    while j < R and rec_steps[j] == 0:
        for s in range(S):
            for p in range(n_paths):
                states[s, p, j, 0] = xs[s, p]
                states[s, p, j, 1] = ys[s, p]
        j += 1
    for step in range(n_steps):
        w = min(step // per_window, n_windows - 1)
        for p in range(n_paths):
            for q in range(4):
                z[p, q] = gen.standard_normal()
        for p in range(n_paths):
            for q in range(2):
                u[p, q] = gen.random()
        for p in range(n_paths):
            for s in range(S):
                x = xs[s, p]
                y = ys[s, p]
                r = math.hypot(x, y)
                if r >= 1.0:
                    occ[s, p] += 1.0
                fint[s, p, w] += forcing(r, f_kind, f_offset) * dt
                x, y = split_step(x, y, dt, eps, z[p, 0], z[p, 1], z[p, 2], z[p, 3], u[p, 0], u[p, 1])
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise FloatingPointError("non-finite state")
                xs[s, p] = x
                ys[s, p] = y
        while j < R and rec_steps[j] == step + 1:
            for s in range(S):
                for p in range(n_paths):
                    states[s, p, j, 0] = xs[s, p]
                    states[s, p, j, 1] = ys[s, p]
            j += 1
    return states, occ, fint


@njit(cache=True)
def run_exit(x0, dt, eps, max_steps, lo, hi, gen):
    """First time ``h_ext`` leaves ``(lo, hi)``; ``which`` is 0 (lo), 1 (hi) or -1."""
    n = x0.shape[0]
    times = np.zeros(n)
    which = np.full(n, -1, np.int64)
    for p in range(n):
        x = x0[p, 0]
        y = x0[p, 1]
        h = h_ext(math.hypot(x, y))
        if h <= lo:
            which[p] = 0
            continue
        if h >= hi:
            which[p] = 1
            continue
        for step in range(max_steps):
            z1 = gen.standard_normal()
            z2 = gen.standard_normal()
            z3 = gen.standard_normal()
            z4 = gen.standard_normal()
            x, y = split_step(x, y, dt, eps, z1, z2, z3, z4, gen.random(), gen.random())
            h = h_ext(math.hypot(x, y))
            if h <= lo:
                which[p] = 0
                times[p] = (step + 1) * dt
                break
            if h >= hi:
                which[p] = 1
                times[p] = (step + 1) * dt
                break
        if which[p] < 0:
            times[p] = max_steps * dt
    return times, which
