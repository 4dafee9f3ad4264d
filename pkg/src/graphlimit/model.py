"""Coefficient fields and geometry of the slow-fast Neumann problem.

A model describes a planar domain ``G`` split into an ergodic region ``E``
(where ``a0`` is non-degenerate) and wells ``U_1..U_r`` on which ``a0`` is
degenerate along the gradient of a first integral ``H_k``.  All fields are
vectorized over leading axes: points have shape ``(..., 2)``, matrices
``(..., 2, 2)``.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

__all__ = [
    "Model",
    "AnnulusModel",
    "Check",
    "ValidationReport",
    "validate",
    "conormal",
    "build_model",
    "FORCINGS",
]

REGION_E = 0
REGION_BAND = -1

FORCINGS = ("radial", "zero", "one")


def _sym_sqrt(a):
    w, v = np.linalg.eigh(a)
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)


class Model(abc.ABC):
    """Abstract slow-fast model on a planar domain.

    Subclasses provide the closed-form fields.  ``sigma*`` default to the
    symmetric square root and the drift divergences to central differences.
    """

    dim = 2
    k_count: int
    m: np.ndarray
    x_min: np.ndarray
    x_O: np.ndarray
    #: step used by the finite-difference divergence fallback
    fd_step = 1e-5

    # geometry -----------------------------------------------------------
    @abc.abstractmethod
    def inside_G(self, x): ...

    @abc.abstractmethod
    def boundary_project(self, x):
        """Nearest boundary point and inward unit normal, each ``(..., 2)``."""

    @abc.abstractmethod
    def bounding_box(self): ...

    @property
    def diameter(self):
        lo, hi = self.bounding_box()
        return float(np.hypot(*(np.asarray(hi) - np.asarray(lo))))

    @abc.abstractmethod
    def well_of(self, x):
        """Index ``k >= 1`` of the well containing ``x``, 0 for ``E``."""

    def region(self, x, band=0.0):
        """0 for E, k for U_k, -1 for points of E within ``band`` of the boundary."""
        x = np.asarray(x, dtype=float)
        reg = np.asarray(self.well_of(x))
        if band > 0.0:
            b, _ = self.boundary_project(x)
            near = np.linalg.norm(x - b, axis=-1) <= band
            reg = np.where((reg == REGION_E) & near, REGION_BAND, reg)
        return reg

    # coefficients -------------------------------------------------------
    @abc.abstractmethod
    def a0(self, x): ...

    @abc.abstractmethod
    def a1(self, x): ...

    def sigma0(self, x):
        return _sym_sqrt(self.a0(x))

    def sigma1(self, x):
        return _sym_sqrt(self.a1(x))

    def div_a0(self, x):
        return self._fd_divergence(self.a0, x)

    def div_a1(self, x):
        return self._fd_divergence(self.a1, x)

    def _fd_divergence(self, a, x):
        x = np.asarray(x, dtype=float)
        h = self.fd_step
        out = np.zeros(x.shape)
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = h
            # row divergence: sum_j d_j a_ij
            out += (a(x + e)[..., :, j] - a(x - e)[..., :, j]) / (2 * h)
        return out

    # first integrals ----------------------------------------------------
    @abc.abstractmethod
    def H_k(self, k, x):
        """Smooth formula of the k-th first integral (valid near the closure of U_k)."""

    @abc.abstractmethod
    def gradH_k(self, k, x): ...

    def H(self, x):
        x = np.asarray(x, dtype=float)
        well = np.asarray(self.well_of(x))
        out = np.zeros(x.shape[:-1])
        for k in range(1, self.k_count + 1):
            mask = well == k
            if np.any(mask):
                out[mask] = self.H_k(k, x[mask])
        return out

    def gradH(self, x):
        x = np.asarray(x, dtype=float)
        well = np.asarray(self.well_of(x))
        out = np.zeros(x.shape)
        for k in range(1, self.k_count + 1):
            mask = well == k
            if np.any(mask):
                out[mask] = self.gradH_k(k, x[mask])
        return out

    def H_ext(self, x):
        """First integral extended past each ``gamma_k`` by the distance-like
        coordinate of the degenerate eigendirection; defaults to ``H``."""
        return self.H(x)

    @abc.abstractmethod
    def f(self, x): ...

    # optional structure-preserving fast flow ----------------------------
    def fast_flow(self, x, dt, eps, noise):
        """Advance the fast ``a0/eps`` dynamics; ``None`` if not available.

        ``noise`` is ``(..., 3)``: two standard normals and a uniform.
        """
        return None

    def slow_flow(self, x, dt, eps, noise):
        """Model-specific slow step (``noise`` as for :meth:`fast_flow`);
        ``None`` selects the generic Euler step with co-normal reflection."""
        return None

    def compiled_forcing(self):
        """Codes for the compiled path kernels; ``None`` if unsupported."""
        return None

    def level_points(self, level, n):
        """``n`` points on the extended level set ``{H_ext = level}``."""
        raise NotImplementedError(f"{type(self).__name__} has no level-set sampler")

    # quadrature ---------------------------------------------------------
    def integrate_G(self, g, n=10**7, seed=0):
        return self._mc_integrate(g, lambda x: np.ones(x.shape[:-1], bool), n, seed)

    def integrate_E(self, g, n=10**7, seed=0):
        return self._mc_integrate(g, lambda x: np.asarray(self.well_of(x)) == REGION_E, n, seed)

    def _mc_integrate(self, g, mask_fn, n, seed, chunk=10**6):
        """Rejection Monte Carlo over the bounding box; returns (value, stderr)."""
        lo, hi = (np.asarray(v, dtype=float) for v in self.bounding_box())
        box = float(np.prod(hi - lo))
        rng = np.random.default_rng(seed)
        s1 = s2 = 0.0
        done = 0
        while done < n:
            k = min(chunk, n - done)
            x = lo + (hi - lo) * rng.random((k, self.dim))
            keep = self.inside_G(x) & mask_fn(x)
            vals = np.where(keep, g(x) if np.any(keep) else 0.0, 0.0) * box
            s1 += vals.sum()
            s2 += (vals**2).sum()
            done += k
        mean = s1 / n
        var = max(s2 / n - mean**2, 0.0)
        return mean, np.sqrt(var / n)


class AnnulusModel(Model):
    """Disk of radius 2 with the unit disk as the single well.

    ``H_1 = (r^2 - 1)/2``, ``a0 = lam(r) e_r e_r^T + r e_th e_th^T`` with
    ``lam = (r-1)^2`` outside the well, ``a1 = I``.  The default forcing
    ``f = r - 4/3`` has zero mean on ``G``.
    """

    R_G = 2.0
    R_U = 1.0

    def __init__(self, forcing="radial", f_offset=0.0, x_O=(1.5, 0.0)):
        if forcing not in FORCINGS:
            raise ValueError(f"unknown forcing {forcing!r}; expected one of {FORCINGS}")
        self.forcing = forcing
        self.f_offset = float(f_offset)
        self.k_count = 1
        self.m = np.array([-0.5])
        self.x_min = np.zeros((1, 2))
        self.x_O = np.asarray(x_O, dtype=float)

    def __repr__(self):
        return f"AnnulusModel(forcing={self.forcing!r}, f_offset={self.f_offset}, x_O={tuple(self.x_O)})"

    def to_dict(self):
        return {"name": "annulus", "forcing": self.forcing, "f_offset": self.f_offset,
                "x_O": [float(v) for v in self.x_O]}

    @staticmethod
    def _polar(x):
        x = np.asarray(x, dtype=float)
        r = np.hypot(x[..., 0], x[..., 1])
        safe = np.where(r > 0, r, 1.0)
        c = np.where(r > 0, x[..., 0] / safe, 1.0)
        s = np.where(r > 0, x[..., 1] / safe, 0.0)
        return r, c, s

    @staticmethod
    def lam(r):
        return np.where(r >= 1.0, (r - 1.0) ** 2, 0.0)

    def inside_G(self, x):
        return np.hypot(x[..., 0], x[..., 1]) <= self.R_G * (1 + 1e-12)

    def boundary_project(self, x):
        r, c, s = self._polar(x)
        n_out = np.stack([c, s], axis=-1)
        return self.R_G * n_out, -n_out

    def bounding_box(self):
        return (-self.R_G, -self.R_G), (self.R_G, self.R_G)

    def well_of(self, x):
        r = np.hypot(x[..., 0], x[..., 1])
        return np.where(r < self.R_U, 1, REGION_E)

    def _polar_matrix(self, d_r, d_t, c, s):
        m = np.empty(c.shape + (2, 2))
        m[..., 0, 0] = d_r * c * c + d_t * s * s
        m[..., 1, 1] = d_r * s * s + d_t * c * c
        m[..., 0, 1] = m[..., 1, 0] = (d_r - d_t) * s * c
        return m

    def a0(self, x):
        r, c, s = self._polar(x)
        return self._polar_matrix(self.lam(r), r, c, s)

    def sigma0(self, x):
        r, c, s = self._polar(x)
        return self._polar_matrix(np.sqrt(self.lam(r)), np.sqrt(r), c, s)

    def a1(self, x):
        shape = np.shape(x)[:-1]
        return np.broadcast_to(np.eye(2), shape + (2, 2)).copy()

    def sigma1(self, x):
        return self.a1(x)

    def div_a0(self, x):
        # div(lam e_r e_r) = (lam' + lam/r) e_r ; div(r e_t e_t) = -e_r
        r, c, s = self._polar(x)
        safe = np.where(r > 0, r, 1.0)
        dlam = np.where(r >= 1.0, 2 * (r - 1.0), 0.0)
        g = np.where(r > 0, dlam + self.lam(r) / safe - 1.0, 0.0)
        return np.stack([g * c, g * s], axis=-1)

    def div_a1(self, x):
        return np.zeros(np.shape(x))

    def H_k(self, k, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (x[..., 0] ** 2 + x[..., 1] ** 2 - 1.0)

    def gradH_k(self, k, x):
        return np.array(x, dtype=float, copy=True)

    def H_ext(self, x):
        # unit-speed flow of e_r past r = 1 gives H = r - 1 outside the well
        r = np.hypot(x[..., 0], x[..., 1])
        return np.where(r < 1.0, 0.5 * (r * r - 1.0), r - 1.0)

    def f_radial(self, r):
        r = np.asarray(r, dtype=float)
        if self.forcing == "radial":
            base = r - 4.0 / 3.0
        elif self.forcing == "zero":
            base = np.zeros_like(r)
        else:
            base = np.ones_like(r)
        return base + self.f_offset

    def f(self, x):
        return self.f_radial(np.hypot(x[..., 0], x[..., 1]))

    def slow_flow(self, x, dt, eps, noise):
        """Brownian step, mirror at ``r = 2`` and a Metropolis test that keeps
        Lebesgue measure exactly invariant; ``noise`` is ``(..., 3)`` holding
        two normals and a uniform."""
        y = x + np.sqrt(dt) * noise[..., 0:2]
        y = self._mirror(y)
        rx = np.hypot(x[..., 0], x[..., 1])
        ry = np.hypot(y[..., 0], y[..., 1])
        near = np.maximum(rx, ry) > self.R_G - 10 * np.sqrt(dt)
        if np.any(near):
            fwd = self._mirror_density(x, y, dt)
            bwd = self._mirror_density(y, x, dt)
            reject = near & (noise[..., 2] * fwd >= bwd)
            y = np.where(reject[..., None], x, y)
        return y

    def _mirror(self, y):
        r = np.hypot(y[..., 0], y[..., 1])
        out = r > self.R_G
        scale = np.where(out, (2 * self.R_G - r) / np.where(out, r, 1.0), 1.0)
        return y * scale[..., None]

    def _mirror_density(self, a, b, dt):
        # density of b after a Gaussian step from a and the mirror, up to a constant
        rb = np.hypot(b[..., 0], b[..., 1])
        q = np.exp(-((b - a) ** 2).sum(-1) / (2 * dt))
        rs = 2 * self.R_G - rb
        safe = np.where(rb > 0, rb, 1.0)
        bs = b * (rs / safe)[..., None]
        q2 = np.exp(-((bs - a) ** 2).sum(-1) / (2 * dt)) * rs / safe
        return q + np.where(rb > 0, q2, 0.0)

    def fast_flow(self, x, dt, eps, noise):
        """Exact rotation along the circles, then a Metropolis-adjusted
        Langevin step for the radial part in ``w = log(r - 1)``.

        In ``w`` the radial motion has diffusion ``1/eps`` and invariant
        density ``(1 + e^w) e^w``; proposals above ``w = 0`` (``r = 2``)
        are mirrored.  ``noise`` is ``(..., 3)``: two normals and a uniform.
        """
        r, c, s = self._polar(x)
        safe = np.where(r > 0, r, 1.0)
        phi = np.where(r > 0, np.sqrt(dt / (eps * safe)), 0.0) * noise[..., 0]
        cp, sp = np.cos(phi), np.sin(phi)
        c, s = c * cp - s * sp, s * cp + c * sp
        act = (r > 1.0) & (r <= self.R_G)
        ra = np.where(act, r, 1.5)
        w = np.log(ra - 1.0)
        var = dt / eps
        shift = (1.0 + (ra - 1.0) / ra) * dt / (2 * eps)
        w2 = -np.abs(w + shift + np.sqrt(var) * noise[..., 1])
        r2 = 1.0 + np.exp(w2)
        shift2 = (1.0 + (r2 - 1.0) / r2) * dt / (2 * eps)

        def log_q(a, b, sh):
            m = a + sh
            return np.logaddexp(-(b - m) ** 2 / (2 * var), -(-b - m) ** 2 / (2 * var))

        log_a = np.log(r2) + w2 - np.log(ra) - w + log_q(w2, w, shift2) - log_q(w, w2, shift)
        u = noise[..., 2]
        with np.errstate(divide="ignore"):
            accept = act & ((u <= 0) | (np.log(u) < log_a))
        r_new = np.where(accept, r2, r)
        return np.stack([r_new * c, r_new * s], axis=-1)

    def compiled_forcing(self):
        """``(kind, offset)`` codes understood by :mod:`graphlimit._kernels`."""
        return FORCINGS.index(self.forcing), self.f_offset

    def level_points(self, level, n):
        """``n`` equally spaced points on ``{H_ext = level}``."""
        if not -0.5 <= level <= 1.0:
            raise ValueError(f"level {level} outside [-0.5, 1]")
        r = np.sqrt(2 * level + 1) if level < 0 else 1.0 + level
        th = 2 * np.pi * np.arange(n) / n
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)

    # polar tensor quadrature: Gauss-Legendre in r, trapezoid in theta
    def _polar_integrate(self, g, r0, r1, n_r=48, n_theta=256):
        t, w = np.polynomial.legendre.leggauss(n_r)
        r = 0.5 * (r1 - r0) * t + 0.5 * (r1 + r0)
        wr = 0.5 * (r1 - r0) * w * r
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        R, TH = np.meshgrid(r, th, indexing="ij")
        x = np.stack([R * np.cos(TH), R * np.sin(TH)], axis=-1)
        vals = np.asarray(g(x), dtype=float)
        return float((vals.sum(axis=1) * wr).sum() * 2 * np.pi / n_theta), 0.0

    def integrate_G(self, g, n=None, seed=None):
        return self._polar_integrate(g, 0.0, self.R_G)

    def integrate_E(self, g, n=None, seed=None):
        return self._polar_integrate(g, self.R_U, self.R_G)

    def integrate_U(self, k, g):
        return self._polar_integrate(g, 0.0, self.R_U)


# ---------------------------------------------------------------------------
# validation


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    location: tuple | None = None

    def line(self):
        loc = "" if self.location is None else f" at {self.location}"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}){loc}"


@dataclass
class ValidationReport:
    checks: dict = field(default_factory=dict)
    n_samples: int = 0

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def add(self, check):
        self.checks[check.name] = check

    def failures(self):
        return [c for c in self.checks.values() if not c.passed]

    def summary(self):
        return "\n".join(c.line() for c in self.checks.values())


def sample_points(model, n, seed=0):
    """Quasi-random (scrambled Halton) points of [G]."""
    lo, hi = (np.asarray(v, dtype=float) for v in model.bounding_box())
    sampler = qmc.Halton(d=model.dim, scramble=True, seed=seed)
    out = []
    have = 0
    while have < n:
        x = qmc.scale(sampler.random(2 * n), lo, hi)
        x = x[model.inside_G(x)]
        out.append(x)
        have += len(x)
    return np.concatenate(out)[:n]


def _max_with_loc(values, x):
    i = int(np.argmax(values))
    return float(values[i]), tuple(float(v) for v in x[i])


def validate(model, sample_count=10_000, *, tol_alg=1e-12, tol_first_integral=1e-10,
             tol_quad=1e-8, seed=0):
    """Check the structural assumptions of ``model`` at quasi-random points."""
    if sample_count < 100:
        raise ValueError("sample_count must be at least 100")
    x = sample_points(model, sample_count, seed=seed)
    rep = ValidationReport(n_samples=len(x))
    fields = {
        "a0": model.a0(x), "a1": model.a1(x),
        "sigma0": model.sigma0(x), "sigma1": model.sigma1(x),
        "f": np.asarray(model.f(x), dtype=float),
    }
    bad = np.zeros(len(x), bool)
    for v in fields.values():
        bad |= ~np.isfinite(v.reshape(len(x), -1)).all(axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        rep.add(Check("finite", float(bad.sum()), 0.0, False, tuple(float(v) for v in x[i])))
        return rep
    rep.add(Check("finite", 0.0, 0.0, True))

    for name in ("a0", "a1"):
        a = fields[name]
        asym = np.abs(a - np.swapaxes(a, -1, -2)).max(axis=(-1, -2))
        v, loc = _max_with_loc(asym, x)
        rep.add(Check(f"{name}_symmetric", v, tol_alg, v <= tol_alg, loc))

    a0, a1 = fields["a0"], fields["a1"]
    eig0 = np.linalg.eigvalsh(0.5 * (a0 + np.swapaxes(a0, -1, -2)))[..., 0]
    v, loc = _max_with_loc(-eig0, x)
    rep.add(Check("a0_psd", max(v, 0.0), tol_alg, v <= tol_alg, loc))
    eig1 = np.linalg.eigvalsh(0.5 * (a1 + np.swapaxes(a1, -1, -2)))[..., 0]
    i = int(np.argmin(eig1))
    rep.add(Check("a1_pd", float(eig1[i]), tol_alg, bool(eig1[i] > tol_alg),
                  tuple(float(c) for c in x[i])))

    for k in (0, 1):
        s, a = fields[f"sigma{k}"], fields[f"a{k}"]
        err = np.abs(s @ np.swapaxes(s, -1, -2) - a).max(axis=(-1, -2))
        v, loc = _max_with_loc(err, x)
        rep.add(Check(f"sigma{k}_reconstruction", v, tol_alg, v <= tol_alg, loc))

    well = np.asarray(model.well_of(x))
    worst, worst_loc = 0.0, None
    for k in range(1, model.k_count + 1):
        xs = x[well == k]
        if len(xs) == 0:
            continue
        res = np.linalg.norm(np.einsum("...ij,...j->...i", model.a0(xs), model.gradH_k(k, xs)), axis=-1)
        v, loc = _max_with_loc(res, xs)
        if worst_loc is None or v > worst:
            worst, worst_loc = v, loc
    rep.add(Check("first_integral", worst, tol_first_integral, worst <= tol_first_integral, worst_loc))

    mean, _ = model.integrate_G(model.f)
    rep.add(Check("zero_mean", abs(mean), tol_quad, abs(mean) <= tol_quad))
    return rep


def conormal(model, x, eps, tol=1e-8):
    """Inward co-normal unit vector ``(a0/eps + a1) n`` at a boundary point."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    b, n = model.boundary_project(x)
    if np.any(np.linalg.norm(x - b, axis=-1) > tol):
        raise ValueError(f"point {x.tolist()} is not on the boundary (tol {tol})")
    a = model.a0(b) / eps + model.a1(b)
    c = np.einsum("...ij,...j->...i", a, n)
    return c / np.linalg.norm(c, axis=-1, keepdims=True)


_REGISTRY = {"annulus": AnnulusModel}


def build_model(cfg):
    """Build a model from a config mapping (``name`` plus constructor keys)."""
    cfg = dict(cfg or {})
    name = cfg.pop("name", "annulus")
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; available: {sorted(_REGISTRY)}") from None
    if "x_O" in cfg:
        cfg["x_O"] = tuple(cfg["x_O"])
    return cls(**cfg)
