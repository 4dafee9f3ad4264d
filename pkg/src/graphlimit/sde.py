"""Simulation of the reflected slow-fast diffusion.

Two time-stepping schemes are available:

``"euler"``
    Cartesian Euler-Maruyama for ``(1/eps) L0 + L1`` with divergence-form
    drift and a co-normal mirror step at the boundary.  Works for any model.
``"split"``
    Lie splitting into the slow ``L1`` step and a structure-preserving fast
    step supplied by the model (``Model.slow_flow``, ``Model.fast_flow``).
    For the annulus the fast step rotates exactly along the circles, so no
    spurious diffusion across the level sets of ``H`` is produced, and both
    substeps carry a Metropolis test that keeps Lebesgue measure (the
    invariant law of the exact process) invariant for every ``dt``.

Random numbers come from independent PCG64 streams, one per block of
``block_size`` paths, seeded by ``SeedSequence(seed, spawn_key=(tag, block))``.
Results therefore depend on the seed and the block size but never on the
number of worker processes.  Each step consumes four standard normals per
path for all paths of the block, then two uniforms per path.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .graph import GraphHistogram, identify_many

__all__ = [
    "SimConfig",
    "SimulationError",
    "ExitTimeStats",
    "OccupationResult",
    "FKResult",
    "step",
    "reflect",
    "block_generator",
    "simulate_paths",
    "simulate_occupation",
    "estimate_exit_time",
    "feynman_kac_u",
    "feynman_kac_many",
    "empirical_marginal",
    "RNG_ALGORITHM",
]

RNG_ALGORITHM = "numpy PCG64, SeedSequence(seed, spawn_key=(tag, block))"
DT_FACTOR = 0.01
DT_MAX_FACTOR = 0.05

# stream tags keep experiments that share a seed statistically independent
TAG_PATHS, TAG_EXIT, TAG_FK_REF, TAG_LEVEL = 1, 2, 3, 4


class SimulationError(RuntimeError):
    """Non-finite state; ``last_state`` holds the last finite state."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class SimConfig:
    """Time stepping and sampling parameters.

    ``dt`` defaults to ``0.01 * eps`` and must not exceed ``0.05 * eps``.
    """

    eps: float
    T: float = 1.0
    n_paths: int = 1000
    seed: int = 0
    dt: float | None = None
    scheme: str = "split"
    engine: str = "auto"
    block_size: int = 256
    workers: int = 1
    debug: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.dt is None:
            object.__setattr__(self, "dt", DT_FACTOR * self.eps)
        if not 0 < self.dt <= DT_MAX_FACTOR * self.eps * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} must lie in (0, {DT_MAX_FACTOR}*eps]")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.scheme not in ("split", "euler"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.engine not in ("auto", "compiled", "numpy"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.block_size < 1 or self.workers < 1:
            raise ValueError("block_size and workers must be >= 1")

    def steps(self, t):
        """Number of steps covering ``[0, t]``."""
        return int(round(t / self.dt))

    def header(self):
        return {"rng": RNG_ALGORITHM, "seed": self.seed, "eps": self.eps, "dt": self.dt,
                "scheme": self.scheme, "block_size": self.block_size}


def block_generator(seed, tag, block):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(tag, block))))


# ---------------------------------------------------------------------------
# single steps


def _matvec(a, v):
    return np.einsum("...ij,...j->...i", a, v)


def reflect(model, x, eps, max_iter=16):
    """Mirror points outside ``G`` along the co-normal at the nearest boundary point.

    The co-normal ``c = (a0/eps + a1) n`` is oblique in general; the point is
    moved along ``c`` by twice its normal depth measured along ``c``.
    """
    x = np.array(x, dtype=float, copy=True)
    for _ in range(max_iter):
        out = ~np.asarray(model.inside_G(x), dtype=bool)
        if not out.any():
            return x
        xo = x[out]
        b, n = model.boundary_project(xo)
        c = _matvec(model.a0(b) / eps + model.a1(b), n)
        c /= np.linalg.norm(c, axis=-1, keepdims=True)
        depth = -np.einsum("...i,...i->...", xo - b, n)
        cn = np.einsum("...i,...i->...", c, n)
        x[out] = xo + (2 * depth / cn)[..., None] * c
    # pathological geometry: fall back to the boundary point
    out = ~np.asarray(model.inside_G(x), dtype=bool)
    if out.any():
        x[out] = model.boundary_project(x[out])[0]
    return x


def _euler_proposal(model, x, dt, eps, z):
    drift = model.div_a0(x) / (2 * eps) + model.div_a1(x) / 2
    return (x + drift * dt + math.sqrt(dt / eps) * _matvec(model.sigma0(x), z[..., 0:2])
            + math.sqrt(dt) * _matvec(model.sigma1(x), z[..., 2:4]))


def _split_step(model, x, dt, eps, z):
    y = model.slow_flow(x, dt, eps, z[..., [0, 1, 4]])
    if y is None:
        y = x + model.div_a1(x) * (dt / 2) + math.sqrt(dt) * _matvec(model.sigma1(x), z[..., 0:2])
        y = reflect(model, y, eps)
    y = model.fast_flow(y, dt, eps, z[..., [2, 3, 5]])
    if y is None:
        raise ValueError(f"{type(model).__name__} provides no fast flow; use scheme='euler'")
    return reflect(model, y, eps)


def step(model, config, x, noise, rng=None, dt=None, _depth=0):
    """One time step from ``x``.

    ``noise`` has shape ``(..., 6)``: four standard normals followed by two
    uniforms on ``[0, 1)`` used by Metropolis-adjusted split steps.  With
    shape ``(..., 4)`` the uniforms are taken as 0, i.e. every proposal is
    accepted.

    With the Euler scheme, proposals that move farther than ``0.1 diam(G)``
    are rejected and replaced by two half steps whose Brownian increments
    are bridged with fresh normals from ``rng``.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape
    x = x.reshape(-1, 2)
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-1] == 4:
        noise = np.concatenate([noise, np.zeros(noise.shape[:-1] + (2,))], axis=-1)
    noise = np.broadcast_to(noise, shape[:-1] + (6,)).reshape(-1, 6)
    dt = config.dt if dt is None else dt
    eps = config.eps
    if config.scheme == "split":
        y = _split_step(model, x, dt, eps, noise)
    else:
        y = _euler_proposal(model, x, dt, eps, noise)
        if not np.all(np.isfinite(y)):
            raise SimulationError("non-finite proposal", x)
        big = np.linalg.norm(y - x, axis=-1) > 0.1 * model.diameter
        if big.any() and _depth < 12:
            if rng is None:
                raise SimulationError("step rejected but no generator available for refinement", x)
            # Brownian bridge: two half steps with the same total increment
            zb = noise[big, :4]
            xi = rng.standard_normal(zb.shape)
            mid = step(model, config, x[big], (zb + xi) / math.sqrt(2), rng, dt / 2, _depth + 1)
            y[big] = step(model, config, mid, (zb - xi) / math.sqrt(2), rng, dt / 2, _depth + 1)
        y = reflect(model, y, eps)
    if not np.all(np.isfinite(y)):
        raise SimulationError("non-finite state", x)
    if config.debug and not np.all(model.inside_G(y)):
        raise SimulationError("state left [G] after reflection", x)
    return y.reshape(shape)


# ---------------------------------------------------------------------------
# path engines


def _use_compiled(model, config):
    ok = config.scheme == "split" and model.compiled_forcing() is not None
    if config.engine == "compiled" and not ok:
        raise ValueError("compiled engine needs the split scheme and a model with compiled kernels")
    return ok and config.engine != "numpy"


def _numpy_block(model, config, x0, n_paths, n_steps, rec_steps, n_windows, gen):
    S = x0.shape[0]
    x = np.broadcast_to(x0[:, None, :], (S, n_paths, 2)).copy()
    states = np.empty((S, n_paths, len(rec_steps), 2))
    occ = np.zeros((S, n_paths))
    fint = np.zeros((S, n_paths, n_windows))
    per_window = max(1, n_steps // n_windows)
    j = 0
    while j < len(rec_steps) and rec_steps[j] == 0:
        states[:, :, j] = x
        j += 1
    for i in range(n_steps):
        w = min(i // per_window, n_windows - 1)
        z = np.concatenate([gen.standard_normal((n_paths, 4)), gen.random((n_paths, 2))], axis=1)
        occ += np.asarray(model.well_of(x)) == 0
        fint[:, :, w] += model.f(x) * config.dt
        x = step(model, config, x, np.broadcast_to(z, (S, n_paths, 6)), rng=gen)
        while j < len(rec_steps) and rec_steps[j] == i + 1:
            states[:, :, j] = x
            j += 1
    return states, occ, fint


def _block_task(args):
    model, config, x0, n_paths, n_steps, rec_steps, n_windows, tag, block = args
    gen = block_generator(config.seed, tag, block)
    if _use_compiled(model, config):
        kind, offset = model.compiled_forcing()
        try:
            return _kernels.run_block(x0, n_paths, n_steps, config.dt, config.eps,
                                      rec_steps, n_windows, kind, offset, gen)
        except FloatingPointError as exc:
            raise SimulationError(str(exc)) from exc
    return _numpy_block(model, config, x0, n_paths, n_steps, rec_steps, n_windows, gen)


def _blocks(config, n_paths):
    sizes = [config.block_size] * (n_paths // config.block_size)
    if n_paths % config.block_size:
        sizes.append(n_paths % config.block_size)
    return sizes


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


@dataclass
class PathRecord:
    """Per-path output of :func:`simulate_paths` for ``S`` starting points."""

    states: np.ndarray  # (S, N, R, 2) at the recorded times
    occupation: np.ndarray  # (S, N) time spent in E
    f_windows: np.ndarray  # (S, N, W) integrals of f over time windows
    times: np.ndarray  # (R,)
    window_edges: np.ndarray  # (W + 1,)


def simulate_paths(model, config, x0, t_end=None, record_times=(), n_windows=1,
                   n_paths=None, tag=TAG_PATHS):
    """Simulate ``n_paths`` paths from each point of ``x0`` sharing the noise.

    Paths started from different points use the same normals (common random
    numbers).  Returns a :class:`PathRecord`.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if not np.all(model.inside_G(x0)):
        raise ValueError("starting point outside [G]")
    t_end = config.T if t_end is None else t_end
    n_paths = config.n_paths if n_paths is None else n_paths
    n_steps = config.steps(t_end)
    rec = np.array(sorted(config.steps(t) for t in record_times), dtype=np.int64)
    if np.any(rec > n_steps) or np.any(rec < 0):
        raise ValueError("record times must lie in [0, t_end]")
    tasks = [(model, config, x0, n, n_steps, rec, n_windows, tag, b)
             for b, n in enumerate(_blocks(config, n_paths))]
    parts = _map(_block_task, tasks, config.workers)
    states = np.concatenate([p[0] for p in parts], axis=1)
    if config.debug and not np.all(model.inside_G(states)):
        raise SimulationError("recorded state outside [G]")
    per_window = max(1, n_steps // n_windows)
    edges = np.r_[np.arange(n_windows) * per_window, n_steps] * config.dt
    # kernels count steps spent in E
    return PathRecord(states, np.concatenate([p[1] for p in parts], axis=1) * config.dt,
                      np.concatenate([p[2] for p in parts], axis=1), rec * config.dt, edges)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class OccupationResult:
    mean: float
    stderr: float
    fractions: np.ndarray = field(repr=False)


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(np.mean(v)), se


def simulate_occupation(model, config, x0):
    """Fraction of ``[0, T]`` spent in ``E``, averaged over paths."""
    rec = simulate_paths(model, config, x0)
    n_steps = config.steps(config.T)
    frac = rec.occupation[0] / (n_steps * config.dt)
    return OccupationResult(*_mean_se(frac), frac)


@dataclass
class ExitTimeStats:
    """First hitting of the target levels of ``H_ext``.

    ``mean``/``stderr`` are over paths that hit before the cap;
    ``hit_frequencies`` are fractions among those paths.
    """

    mean: float
    stderr: float
    count: int
    hit_frequencies: dict
    n_paths: int
    n_censored: int
    cap: float
    times: np.ndarray = field(repr=False)
    which: np.ndarray = field(repr=False)

    @property
    def censored_fraction(self):
        return self.n_censored / self.n_paths

    def probability(self, level):
        return self.hit_frequencies.get(level, 0.0)


def _start_points(model, start, n, seed):
    if callable(start):
        pts = np.asarray(start(block_generator(seed, TAG_LEVEL, 0), n), dtype=float)
    else:
        pts = np.asarray(start, dtype=float)
        pts = np.broadcast_to(pts, (n, 2)) if pts.ndim == 1 else pts
    if pts.shape != (n, 2):
        raise ValueError(f"start must give {n} points, got shape {pts.shape}")
    return np.ascontiguousarray(pts)


def _exit_numpy(model, config, x0, max_steps, lo, hi, gen):
    x = x0.copy()
    n = x.shape[0]
    times = np.zeros(n)
    which = np.full(n, -1, np.int64)
    h = model.H_ext(x)
    which[h <= lo] = 0
    which[(h >= hi) & (which < 0)] = 1
    active = which < 0
    for i in range(max_steps):
        if not active.any():
            break
        z = np.concatenate([gen.standard_normal((n, 4)), gen.random((n, 2))], axis=1)
        x[active] = step(model, config, x[active], z[active], rng=gen)
        h = model.H_ext(x)
        lo_hit = active & (h <= lo)
        hi_hit = active & (h >= hi) & ~lo_hit
        which[lo_hit], which[hi_hit] = 0, 1
        times[lo_hit | hi_hit] = (i + 1) * config.dt
        active &= ~(lo_hit | hi_hit)
    times[active] = max_steps * config.dt
    return times, which


def _exit_task(args):
    model, config, x0, max_steps, lo, hi, block = args
    gen = block_generator(config.seed, TAG_EXIT, block)
    if _use_compiled(model, config):
        return _kernels.run_exit(x0, config.dt, config.eps, max_steps, lo, hi, gen)
    return _exit_numpy(model, config, x0, max_steps, lo, hi, gen)


def estimate_exit_time(model, config, start, targets, tol=1e-12):
    """First time the extended first integral ``H_ext`` reaches a target level.

    Parameters
    ----------
    start : point, array of ``n_paths`` points, or ``callable(rng, n)``
        Starting points, all on one level of ``H_ext``.
    targets : sequence of float
        Target levels.  Paths started between two levels stop at whichever
        is reached first; a start on a target level stops at time 0.

    Paths that hit nothing before ``100 * T`` are censored and reported in
    ``n_censored``, not dropped silently.
    """
    targets = sorted(float(t) for t in targets)
    if not targets:
        raise ValueError("at least one target level is required")
    x0 = _start_points(model, start, config.n_paths, config.seed)
    h0 = np.asarray(model.H_ext(x0), dtype=float)
    if np.ptp(h0) > 1e-9:
        raise ValueError("starting points must lie on a single level of H_ext")
    level = float(h0[0])
    cap = 100 * config.T
    max_steps = config.steps(cap)
    on = [t for t in targets if abs(t - level) <= max(tol, 1e-9)]
    if on:
        n = config.n_paths
        freqs = {t: (1.0 if t == on[0] else 0.0) for t in targets}
        return ExitTimeStats(0.0, 0.0, n, freqs, n, 0, cap, np.zeros(n), np.zeros(n, np.int64))
    below = [t for t in targets if t < level]
    above = [t for t in targets if t > level]
    lo = below[-1] if below else -np.inf
    hi = above[0] if above else np.inf
    sizes = _blocks(config, config.n_paths)
    offs = np.r_[0, np.cumsum(sizes)]
    tasks = [(model, config, x0[offs[b]:offs[b + 1]], max_steps, lo, hi, b) for b in range(len(sizes))]
    parts = _map(_exit_task, tasks, config.workers)
    times = np.concatenate([p[0] for p in parts])
    which = np.concatenate([p[1] for p in parts])
    hit = which >= 0
    count = int(hit.sum())
    mean, se = _mean_se(times[hit]) if count else (float("nan"), float("nan"))
    freqs = {t: 0.0 for t in targets}
    if count:
        if below:
            freqs[lo] = float(np.count_nonzero(which == 0) / count)
        if above:
            freqs[hi] = float(np.count_nonzero(which == 1) / count)
    return ExitTimeStats(mean, se, count, freqs, config.n_paths, config.n_paths - count, cap, times, which)


@dataclass
class FKResult:
    """Feynman-Kac estimate of ``u^eps`` at several points.

    ``tail`` holds, per point, the mean of ``f(X^{x_O}) - f(X^x)`` over the
    last time window; ``decayed`` tells whether it is below
    ``max(3 SE, tail_tol)``.  ``tail_slope`` is the least-squares slope of
    ``log |window mean|`` against time over the second half of ``[0, t_max]``.
    """

    x: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    t_max: float
    tail: np.ndarray
    tail_stderr: np.ndarray
    tail_slope: np.ndarray
    decayed: np.ndarray
    crn: bool
    n_paths: int
    doublings: int = 0

    @property
    def warning(self):
        return not bool(np.all(self.decayed))


def _tail_stats(d, edges, tail_tol):
    # d: (S, N, W) window integrals of the paired difference
    width = np.diff(edges)
    m = d.mean(axis=1) / width
    se = d.std(axis=1, ddof=1) / np.sqrt(d.shape[1]) / width if d.shape[1] > 1 else np.zeros_like(m)
    tail, tail_se = m[:, -1], se[:, -1]
    decayed = np.abs(tail) <= np.maximum(3 * tail_se, tail_tol)
    centers = 0.5 * (edges[1:] + edges[:-1])
    half = centers >= centers[-1] / 2
    slope = np.full(m.shape[0], np.nan)
    for i in range(m.shape[0]):
        y = np.abs(m[i, half])
        if np.all(y > 0) and half.sum() >= 2:
            slope[i] = np.polyfit(centers[half], np.log(y), 1)[0]
    return tail, tail_se, slope, decayed


def feynman_kac_many(model, config, xs, t_max=8.0, n_paths=None, crn=True, n_windows=16,
                     tail_tol=2e-3, max_doublings=2):
    """``u^eps(x) = -int_0^t_max E_x f dt + int_0^t_max E_{x_O} f dt`` at every ``x``.

    With ``crn`` all points and ``x_O`` share the same noise, which makes
    ``u^eps(x_O)`` exactly 0 and greatly reduces the variance of the
    difference.  If the paired integrand has not decayed in the last
    window, the run is repeated with doubled ``t_max`` (same streams, so
    the common prefix is reproduced) up to ``max_doublings`` times.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n_paths = config.n_paths if n_paths is None else n_paths
    xO = np.asarray(model.x_O, dtype=float)
    doublings = 0
    while True:
        if crn:
            rec = simulate_paths(model, config, np.vstack([xO, xs]), t_max, n_windows=n_windows,
                                 n_paths=n_paths)
            ref, fx = rec.f_windows[0][None], rec.f_windows[1:]
        else:
            rec = simulate_paths(model, config, xs, t_max, n_windows=n_windows, n_paths=n_paths)
            ref_rec = simulate_paths(model, config, xO, t_max, n_windows=n_windows,
                                     n_paths=n_paths, tag=TAG_FK_REF)
            ref, fx = ref_rec.f_windows, rec.f_windows
        d = ref - fx
        per_path = d.sum(axis=2)
        value = per_path.mean(axis=1)
        se = per_path.std(axis=1, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.full(len(xs), np.nan)
        tail, tail_se, slope, decayed = _tail_stats(d, rec.window_edges, tail_tol)
        if np.all(decayed) or doublings >= max_doublings:
            break
        t_max *= 2
        doublings += 1
    res = FKResult(xs, value, se, t_max, tail, tail_se, slope, decayed, crn, n_paths, doublings)
    if res.warning:
        warnings.warn(f"Feynman-Kac integrand not decayed by t_max={t_max}", RuntimeWarning,
                      stacklevel=2)
    return res


def feynman_kac_u(model, config, x, t_max=8.0, n_paths=None, **kw):
    """Single-point version of :func:`feynman_kac_many`; returns ``(value, stderr, result)``."""
    res = feynman_kac_many(model, config, np.asarray(x, dtype=float)[None], t_max, n_paths, **kw)
    return float(res.value[0]), float(res.stderr[0]), res


def empirical_marginal(model, config, x0, t, n_bins=32):
    """Empirical law of ``identify(X_t)``: atom at the root plus ``n_bins`` bins per edge."""
    if not 0 <= t <= config.T * (1 + 1e-12):
        raise ValueError(f"t={t} must lie in [0, T={config.T}]")
    rec = simulate_paths(model, config, x0, t_end=t, record_times=(t,))
    edge, h = identify_many(model, rec.states[0, :, 0])
    return GraphHistogram.from_samples(model.m, edge, h, n_bins)


def with_eps(config, eps, **kw):
    """Copy of ``config`` at a new ``eps`` with ``dt`` rescaled by the same factor."""
    factor = config.dt / config.eps
    return replace(config, eps=eps, dt=factor * eps, **kw)
