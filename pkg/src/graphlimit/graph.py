"""Star graph, identification map and averaged edge coefficients.

Level curves ``C_k(h)`` of a single-well first integral are star-shaped
around the well bottom, so they are traced by bisection along rays and
integrated with the periodic trapezoidal rule in the ray angle.  The
Jacobian of the angle parametrization comes from implicit
differentiation of ``H_k(x_min + rho(phi) e(phi)) = h``.

Integrals along an edge are taken in ``s = sqrt(h - m_k)``: averaged
quantities behave like smooth functions of the level-curve radius, which is
proportional to ``s`` near a non-degenerate minimum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "GraphPoint",
    "Graph",
    "EdgeCoefficients",
    "QuadratureError",
    "identify",
    "identify_many",
    "level_set_integral",
    "sublevel_integral",
    "compute_coefficients",
    "edge_cumulative",
    "edge_integral",
    "GraphHistogram",
]

SCHEMA = "graphlimit.edge_coefficients/1"


class QuadratureError(RuntimeError):
    """Successive refinements of a quadrature disagree beyond tolerance."""


@dataclass(frozen=True)
class GraphPoint:
    """``edge == 0`` is the root ``O``; otherwise ``(edge, h)`` with ``m_k <= h <= 0``.

    ``(k, 0)`` is normalized to the root so that it compares equal to it.
    """

    edge: int = 0
    h: float = 0.0

    def __post_init__(self):
        if self.edge < 0:
            raise ValueError("edge index must be >= 0")
        if self.edge == 0 and self.h != 0.0:
            raise ValueError("the root has h = 0")
        if self.h > 0.0:
            raise ValueError("edge coordinates satisfy h <= 0")
        if self.h == 0.0:
            object.__setattr__(self, "edge", 0)
            object.__setattr__(self, "h", 0.0)

    @classmethod
    def root(cls):
        return cls(0, 0.0)

    @property
    def is_root(self):
        return self.edge == 0

    def __repr__(self):
        return "RootO" if self.is_root else f"Edge({self.edge}, {self.h:.6g})"


@dataclass(frozen=True)
class Graph:
    """Edges ``I_k = [m_k, 0]`` joined at the root; exterior vertices at ``m_k``."""

    minima: tuple

    def __post_init__(self):
        if any(m >= 0 for m in self.minima):
            raise ValueError("edge minima must be negative")

    @classmethod
    def from_model(cls, model):
        return cls(tuple(float(v) for v in model.m))

    @property
    def edges(self):
        return [(k, m, 0.0) for k, m in enumerate(self.minima, start=1)]

    def exterior_vertex(self, k):
        return GraphPoint(k, self.minima[k - 1])

    def contains(self, y):
        return y.is_root or (1 <= y.edge <= len(self.minima) and self.minima[y.edge - 1] <= y.h <= 0)

    def distance(self, y1, y2):
        if y1.edge == y2.edge:
            return abs(y1.h - y2.h)
        return abs(y1.h) + abs(y2.h)


def identify(model, x):
    """Project a point of [G] onto the graph."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"expected a single point of shape ({model.dim},)")
    if not bool(model.inside_G(x)):
        raise ValueError(f"point {x.tolist()} is outside [G]")
    k = int(model.well_of(x))
    if k == 0:
        return GraphPoint.root()
    h = float(model.H_k(k, x))
    return GraphPoint(k, min(max(h, float(model.m[k - 1])), 0.0))


def identify_many(model, x):
    """Vectorized identification: returns ``(edge, h)`` arrays (edge 0 is the root)."""
    x = np.asarray(x, dtype=float)
    edge = np.asarray(model.well_of(x)).astype(np.int64)
    h = np.where(edge > 0, model.H(x), 0.0)
    return edge, h


# ---------------------------------------------------------------------------
# level curves


def _trace(model, k, hs, n_nodes, iters=24, newton=3):
    """Points on ``C_k(h)`` for every h in ``hs`` and their arc-length weights."""
    hs = np.atleast_1d(np.asarray(hs, dtype=float))
    mk = float(model.m[k - 1])
    if np.any(hs <= mk) or np.any(hs > 0):
        raise ValueError(f"level h must lie in (m_k, 0] = ({mk}, 0]; got {hs.min()}..{hs.max()}")
    phi = 2 * np.pi * np.arange(n_nodes) / n_nodes
    e = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    e_phi = np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
    x0 = model.x_min[k - 1]
    rmax = model.diameter
    top = model.H_k(k, x0 + rmax * e)
    if np.any(top < hs.max()):
        raise ValueError(f"level curve C_{k}({hs.max()}) not found along every ray")
    lo = np.zeros((len(hs), n_nodes))
    hi = np.full((len(hs), n_nodes), rmax)
    target = hs[:, None]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = model.H_k(k, x0 + mid[..., None] * e) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    rho = 0.5 * (lo + hi)
    for _ in range(newton):
        pts = x0 + rho[..., None] * e
        slope = np.einsum("...i,...i->...", model.gradH_k(k, pts), e)
        rho = np.clip(rho - (model.H_k(k, pts) - target) / slope, lo, hi)
    pts = x0 + rho[..., None] * e
    g = model.gradH_k(k, pts)
    drho = -rho * np.einsum("...i,...i->...", g, e_phi) / np.einsum("...i,...i->...", g, e)
    w = np.hypot(rho, drho) * (2 * np.pi / n_nodes)
    return pts, w, rho


def level_set_integral(model, k, h, integrand, n_nodes=256):
    """``oint_{C_k(h)} integrand dsigma`` for ``m_k < h <= 0``."""
    pts, w, _ = _trace(model, k, [h], n_nodes)
    return float(np.sum(np.asarray(integrand(pts[0]), dtype=float) * w[0]))


def sublevel_integral(model, k, h, g, n_nodes=256, n_radial=32):
    """``int_{H_k < h} g dx`` by Gauss-Legendre along rays of the star-shaped set."""
    _, _, rho = _trace(model, k, [h], n_nodes)
    t, wt = np.polynomial.legendre.leggauss(n_radial)
    phi = 2 * np.pi * np.arange(n_nodes) / n_nodes
    e = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    s = 0.5 * rho[0][:, None] * (t + 1)
    pts = model.x_min[k - 1] + s[..., None] * e[:, None, :]
    vals = np.asarray(g(pts), dtype=float) * s * (0.5 * rho[0][:, None]) * wt
    return float(vals.sum() * 2 * np.pi / n_nodes)


# ---------------------------------------------------------------------------
# integration along an edge in s = sqrt(h - m)


def _s_spline(h, m, y):
    s = np.sqrt(np.clip(np.asarray(h) - m, 0.0, None))
    return s, CubicSpline(s, np.asarray(y) * 2 * s)


def edge_cumulative(h, m, y):
    """Cumulative ``int_m^{h_i} y dh`` at every node of the edge grid."""
    s, sp = _s_spline(h, m, y)
    return sp.antiderivative()(s) - sp.antiderivative()(s[0])


def edge_integral(h, m, y):
    return float(edge_cumulative(h, m, y)[-1])


# ---------------------------------------------------------------------------
# averaged coefficients


@dataclass
class EdgeCoefficients:
    """Tabulated ``M_k``, ``abar_k``, ``fbar_k`` on ``m_k = h_0 < ... < h_n = 0``
    plus the root scalars ``p_k``, ``Vol(E)`` and ``fbar(O)``."""

    m: np.ndarray
    h: list
    M: list
    abar: list
    fbar: list
    p: np.ndarray
    vol_E: float
    fbar_O: float
    vol_U: np.ndarray
    vol_E_stderr: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def edge_count(self):
        return len(self.m)

    def flux_coefficient(self, k):
        return self.M[k - 1] * self.abar[k - 1]

    def s(self, k):
        return np.sqrt(np.clip(self.h[k - 1] - self.m[k - 1], 0.0, None))

    def interpolate(self, k, name, h):
        """Cubic-spline interpolation in ``s`` of a tabulated quantity.

        ``name`` is one of ``M``, ``abar``, ``fbar``, ``Mabar``.
        """
        y = self.flux_coefficient(k) if name == "Mabar" else getattr(self, name)[k - 1]
        sp = CubicSpline(self.s(k), y)
        h = np.asarray(h, dtype=float)
        return sp(np.sqrt(np.clip(h - self.m[k - 1], 0.0, None)))

    def edge_volume(self, k):
        return edge_integral(self.h[k - 1], self.m[k - 1], self.M[k - 1])

    def compatibility_residual(self):
        """``Vol(E) fbar(O) + sum_k int fbar_k M_k dh`` (zero for zero-mean forcing)."""
        total = self.vol_E * self.fbar_O
        for k in range(1, self.edge_count + 1):
            total += edge_integral(self.h[k - 1], self.m[k - 1], self.fbar[k - 1] * self.M[k - 1])
        return float(total)

    def total_volume(self):
        return self.vol_E + sum(self.edge_volume(k) for k in range(1, self.edge_count + 1))

    def to_json(self):
        doc = {
            "schema": SCHEMA,
            "m": self.m.tolist(),
            "vol_E": self.vol_E,
            "vol_E_stderr": self.vol_E_stderr,
            "fbar_O": self.fbar_O,
            "p": self.p.tolist(),
            "vol_U": self.vol_U.tolist(),
            "edges": [
                {"k": k + 1, "h": self.h[k].tolist(), "M": self.M[k].tolist(),
                 "abar": self.abar[k].tolist(), "fbar": self.fbar[k].tolist()}
                for k in range(self.edge_count)
            ],
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"unsupported schema {doc.get('schema')!r}")
        edges = sorted(doc["edges"], key=lambda e: e["k"])
        return cls(
            m=np.array(doc["m"]),
            h=[np.array(e["h"]) for e in edges],
            M=[np.array(e["M"]) for e in edges],
            abar=[np.array(e["abar"]) for e in edges],
            fbar=[np.array(e["fbar"]) for e in edges],
            p=np.array(doc["p"]),
            vol_E=doc["vol_E"],
            fbar_O=doc["fbar_O"],
            vol_U=np.array(doc["vol_U"]),
            vol_E_stderr=doc.get("vol_E_stderr", 0.0),
            meta=doc.get("meta", {}),
        )


def _extrapolate_to_min(s, y, order=3):
    # polynomial in s through the first interior nodes
    c = np.polyfit(s[1:order + 2], y[1:order + 2], order)
    return float(np.polyval(c, 0.0))


def _level_averages(model, k, hs, n_nodes):
    pts, w, _ = _trace(model, k, hs, n_nodes)
    g = model.gradH_k(k, pts)
    gn = np.linalg.norm(g, axis=-1)
    ag = np.einsum("...ij,...i,...j->...", model.a1(pts), g, g)
    M = np.sum(w / gn, axis=-1)
    MA = np.sum(w * ag / gn, axis=-1)
    F = np.sum(w * np.asarray(model.f(pts), dtype=float) / gn, axis=-1)
    return M, MA, F


def compute_coefficients(model, n=512, n_nodes=256, tol=1e-8, check_every=8):
    """Tabulate the averaged coefficients on a uniform ``h`` grid of ``n`` cells.

    Every ``check_every``-th level is recomputed with doubled angular nodes;
    a relative change above ``tol`` raises :class:`QuadratureError`.
    """
    hs_all, Ms, As, Fs, ps, vol_U = [], [], [], [], [], []
    for k in range(1, model.k_count + 1):
        mk = float(model.m[k - 1])
        h = np.linspace(mk, 0.0, n + 1)
        M, MA, F = _level_averages(model, k, h[1:], n_nodes)
        sub = h[1:][::-1][::check_every]
        M2, MA2, F2 = _level_averages(model, k, sub, 2 * n_nodes)
        M1, MA1, F1 = (v[::-1][::check_every] for v in (M, MA, F))
        for name, a, b in (("M", M1, M2), ("M*abar", MA1, MA2), ("int f", F1, F2)):
            scale = np.maximum(np.abs(b), 1e-300)
            rel = np.abs(a - b) / np.where(np.abs(b) > 1e-12, scale, 1.0)
            if np.max(rel) > tol:
                i = int(np.argmax(rel))
                raise QuadratureError(
                    f"{name} on edge {k} not converged at h={sub[i]:.6g}: "
                    f"{a[i]!r} vs {b[i]!r} with {n_nodes}/{2 * n_nodes} nodes")
        s = np.sqrt(h - mk)
        M = np.r_[np.nan, M]
        abar = np.r_[0.0, MA / M[1:]]
        fbar = np.r_[np.nan, F / M[1:]]
        M[0] = _extrapolate_to_min(s, M)
        fbar[0] = _extrapolate_to_min(s, fbar)
        if np.any(M <= 0) or np.any(abar[1:] <= 0):
            raise ValueError(f"non-positive averaged coefficient on edge {k}")
        hs_all.append(h)
        Ms.append(M)
        As.append(abar)
        Fs.append(fbar)
        ps.append(MA[-1])
        vol_U.append(sublevel_integral(model, k, 0.0, lambda x: np.ones(x.shape[:-1]), n_nodes))
    vol_E, vol_se = model.integrate_E(lambda x: np.ones(x.shape[:-1]))
    int_f, _ = model.integrate_E(model.f)
    return EdgeCoefficients(
        m=np.asarray(model.m, dtype=float), h=hs_all, M=Ms, abar=As, fbar=Fs,
        p=np.array(ps), vol_E=float(vol_E), fbar_O=float(int_f / vol_E),
        vol_U=np.array(vol_U), vol_E_stderr=float(vol_se),
        meta={"model": repr(model), "n": n, "n_nodes": n_nodes},
    )


# ---------------------------------------------------------------------------
# laws on the graph


@dataclass
class GraphHistogram:
    """Probability law on the graph: an atom at the root plus binned edge mass.

    ``bins[k - 1]`` are the bin edges on ``[m_k, 0]`` and ``mass[k - 1]`` the
    probabilities of the bins (not densities).
    """

    root_mass: float
    bins: list
    mass: list
    n_samples: int = 0

    @staticmethod
    def edge_bins(minima, n_bins=32):
        return [np.linspace(m, 0.0, n_bins + 1) for m in minima]

    @classmethod
    def from_samples(cls, minima, edge, h, n_bins=32):
        edge = np.asarray(edge)
        h = np.asarray(h, dtype=float)
        n = edge.size
        if n == 0:
            raise ValueError("no samples")
        bins = cls.edge_bins(minima, n_bins)
        mass = []
        for k, b in enumerate(bins, start=1):
            idx = np.clip(np.searchsorted(b, h[edge == k], side="right") - 1, 0, n_bins - 1)
            mass.append(np.bincount(idx, minlength=n_bins) / n)
        return cls(float(np.count_nonzero(edge == 0) / n), bins, mass, n)

    def vector(self):
        return np.concatenate([[self.root_mass], *self.mass])

    def total(self):
        return float(self.vector().sum())

    def tv_distance(self, other):
        """``(1/2) sum |p - q|`` over the atom and all bins."""
        if len(self.bins) != len(other.bins) or any(
                a.shape != b.shape or not np.allclose(a, b) for a, b in zip(self.bins, other.bins)):
            raise ValueError("histograms use different bins")
        return 0.5 * float(np.abs(self.vector() - other.vector()).sum())

    def rows(self):
        """``(edge, h_lo, h_hi, mass)`` rows, root first with ``h_lo = h_hi = 0``."""
        out = [(0, 0.0, 0.0, self.root_mass)]
        for k, (b, p) in enumerate(zip(self.bins, self.mass), start=1):
            out.extend((k, float(b[i]), float(b[i + 1]), float(p[i])) for i in range(len(p)))
        return out
